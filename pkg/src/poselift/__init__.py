"""poselift: semi-automatic 3D hand pose annotation for depth sequences.

Turns a depth video plus sparse 2D annotations on a few reference frames
into full-sequence 3D joint labels: reference frames are chosen so every
frame has a similar-looking neighbor, annotated frames are lifted to 3D
under bone-length and visibility constraints, poses are propagated
frame-to-frame, and a sparse global refinement ties everything together.
"""

__version__ = "0.1.0"
