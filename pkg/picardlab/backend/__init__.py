"""Backend package for the PicardLab BSDE solver and certification toolkit."""
