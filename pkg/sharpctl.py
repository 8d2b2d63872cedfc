#!/usr/bin/env python3
"""
sharpctl - Standalone CLI Tool
This is a wrapper that makes sharpctl work without installation.

Run this as: python sharpctl.py [COMMAND] [OPTIONS]
"""

import sys
from pathlib import Path

# Add current directory to path so imports work
current_dir = Path(__file__).parent
sys.path.insert(0, str(current_dir))

from sharpctl.cli import main

if __name__ == "__main__":
    main()
