"""Trained-trajectory parking: multi-fisheye SLAM training, binary map
persistence, replay relocalization, and a seeded synthetic evaluation
harness."""

__version__ = "0.1.0"
