"""
Perceptual image hashing
"""

from .image_ops import (HashError, RasterImage, dct2, grayscale, haar_dwt2, idct2, load_raster,
                        resize, rgb_to_hsv, save_png)
from .perceptual_hash import (ALGORITHMS, GRAYSCALE_ALGORITHMS, PerceptualHash, ahash, colorhash,
                              dhash, hamming, hash_file, hash_image, phash, whash)

__all__ = [
    "HashError", "RasterImage", "dct2", "grayscale", "haar_dwt2", "idct2", "load_raster", "resize",
    "rgb_to_hsv", "save_png",
    "ALGORITHMS", "GRAYSCALE_ALGORITHMS", "PerceptualHash", "ahash", "colorhash", "dhash",
    "hamming", "hash_file", "hash_image", "phash", "whash",
]
