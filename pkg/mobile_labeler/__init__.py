"""Mobile-object label discovery from unlabeled multi-traversal LiDAR"""

__version__ = "0.1.0"
