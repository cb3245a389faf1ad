"""Occlusion-robust human mesh recovery on a procedural parametric body.

Pipeline: a capsule-limb body model posed by axis-angle joint rotations is
rasterized to dense part/UV correspondence maps; image features are wrapped
through those correspondences into a part-packed UV atlas; an attention
head completes the partial UV map into per-part feature vectors that drive
iterative regression of pose, shape, and camera.  Training on synthetic
renders with scripted occlusions, plus a feature-inpainting fine-tune,
makes the regressor robust to occluded evidence.
"""

__version__ = "0.1.0"
