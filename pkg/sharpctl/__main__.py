"""
Entry point for running sharpctl as a module: python -m sharpctl

This allows the package to be run as:
  python -m sharpctl.cli <command>
  python -m sharpctl <command>
"""

from sharpctl.cli import main

if __name__ == "__main__":
    main()
