"""ScaForge — power side-channel workbench for protected AES and Saber."""

__version__ = "0.1.0"
