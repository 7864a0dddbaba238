"""Top-level package for Online ST Core."""

__author__ = """onlinest developers"""
__email__ = 'onlinest@users.noreply.github.com'
__version__ = '0.1.0'
