"""3D holistically-nested CNN pipeline for abdominal aortic aneurysm segmentation."""
__version__ = "0.1.0"
