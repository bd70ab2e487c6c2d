"""Collaborative voxel/point-cloud learning for volumetric object
classification: a 3D-CNN image branch and a point-cloud GNN geometry branch
trained jointly, with built-in attribution and a synthetic cohort generator."""

__version__ = "0.1.0"
