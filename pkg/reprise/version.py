"""
Version, release date and license of reprise; the version is written into every run manifest.
"""

__all__ = ["__version__", "__versiondate__", "__license__"]

__version__ = "0.1.0"
__versiondate__ = '2026-10-19'
__license__ = "MIT"
