"""ScaForge — Run as module: python -m src"""

from .cli import main

if __name__ == "__main__":
    main()
