#!/usr/bin/env python
"""
Command-line entry point for the embroidery-lora CLI.

Equivalent to the ``embroidery-lora`` console script when the package is
not installed.
"""

import sys

from embroidery_lora.cli import main

if __name__ == "__main__":
    sys.exit(main())
