"""Multimodal place recognition on 3D Gaussian scene representations.

The pipeline runs in four stages: scene preparation from LiDAR + camera
frames (`mgs_prep`), cylindrical voxel encoding (`voxelizer`), a graph
convolution + attention + VLAD descriptor network with analytic gradients
(`descriptor`), and triplet training plus recall evaluation (`trainer`,
`retrieval`). `cli` wires the stages into batch subcommands.
"""

__version__ = "0.1.0"
