"""
Synthetic locale corpus: generation, augmentation and on-disk storage
"""
