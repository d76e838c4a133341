#!/usr/bin/env python3
"""
GAPA pipeline launcher.

    python run_gapa.py gen-toy --kind two_moons --out-dir toy
    python run_gapa.py cache  --config toy/pipeline.json
    python run_gapa.py induce --config toy/pipeline.json --m 200
    python run_gapa.py attach --config toy/pipeline.json
    python run_gapa.py infer  --config toy/pipeline.json
    python run_gapa.py eval   --config toy/pipeline.json
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
