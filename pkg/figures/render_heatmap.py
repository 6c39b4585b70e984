#!/usr/bin/env python3
"""Render the heatmap figure kind from a simulator CSV."""

import sys

from figlib import script_main

if __name__ == "__main__":
    sys.exit(script_main("heatmap"))
