"""Text-to-speech to voice-conversion transfer learning at desk scale."""

__version__ = "0.1.0"
