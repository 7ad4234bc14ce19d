#!/usr/bin/env python3
"""
Main entry point for the DualFast sampler lab.
"""

import sys

from app.cli import main

if __name__ == '__main__':
    sys.exit(main())
