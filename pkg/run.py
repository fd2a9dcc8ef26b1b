"""
Entry point for the GMWB Monte Carlo engine.

Usage: python run.py [--config FILE] COMMAND [options]
"""

import sys
from pathlib import Path

# Add src directory to path
src_path = Path(__file__).parent / "src"
sys.path.insert(0, str(src_path))

from cli import main

if __name__ == "__main__":
    sys.exit(main())
