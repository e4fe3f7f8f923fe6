"""Event-camera cross-platform adaptation: voxel grids, activation priors, EventBlend and EventMatch."""

__version__ = "0.1.0"
