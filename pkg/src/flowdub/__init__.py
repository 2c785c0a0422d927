"""Unified video/text-to-audio generation with conditional flow matching at desk scale."""

__version__ = "0.1.0"
