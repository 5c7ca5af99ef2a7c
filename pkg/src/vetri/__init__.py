"""vetri: differential evaluation harness for container vulnerability scanners.

Extracts package inventories from container images, matches them against
vulnerability feeds, ingests reports from third-party scanners, and computes
cross-tool quality metrics (per-class coverage, detection hit ratio, and the
complete vulnerability landscape).
"""

__version__ = "0.1.0"
