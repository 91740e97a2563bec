"""Interactive voxelwise segmentation of large 3D grayscale volumes.

Geometric features from local voxel environments feed a nu-SVM whose
calibrated confidences drive an uncertainty-guided labeling loop, with an
optional multiresolution candidate-pruning pass for large volumes.
"""

__version__ = "0.1.0"
