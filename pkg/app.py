#!/usr/bin/env python3
"""
Entry point - gated cross-attention affinity toolkit
Run from the project root: python app.py <command> [options]
"""

import os
import sys

# Add current directory to path so the package imports when run as a script
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from gca_dti.cli import main

if __name__ == '__main__':
    sys.exit(main())
