"""
Topology modules: cubical filtrations and their persistence diagrams.
"""
