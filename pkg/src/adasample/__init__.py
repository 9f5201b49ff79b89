"""Adaptive image-space sampling and reconstruction for CPU volume rendering.

An importance map inferred from a low-resolution render steers where a ray
caster takes samples; a pull-push inpainter and a residual network rebuild
the dense image. Sampling and reconstruction are differentiable end to end,
so both networks train jointly from image losses alone.
"""

__version__ = "0.1.0"
