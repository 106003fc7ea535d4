"""
Holds the python -m scalefusion_ts entry point
"""
import sys

from scalefusion_ts.cli import main

sys.exit(main())
