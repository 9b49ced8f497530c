"""RothFit - Multiscale closed-curve shape models"""
__version__ = "0.1.0"
