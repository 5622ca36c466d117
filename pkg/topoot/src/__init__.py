"""
TopoOT: topology-aware optimal transport binarization of anomaly score maps.
"""
__version__ = "0.1.0"
