#!/usr/bin/env python3
"""
Operator entry point for the pose pretraining and sign language pipelines

Usage:
    python signbert_cli.py gen-synthetic --classes 20 --per-class 50 --out data
    python signbert_cli.py pretrain --data data --out runs/pretrain
    python signbert_cli.py finetune --task islr --init runs/pretrain/checkpoint.pt --data data --out runs/islr
"""

import logging
import os
import sys

from dotenv import load_dotenv

# Add src directory to path
src_path = os.path.join(os.path.dirname(__file__), 'src')
sys.path.append(src_path)

from signbert.cli import run_command  # noqa: E402

# Load environment variables
load_dotenv()

logging.basicConfig(
    level=os.getenv("SIGNBERT_LOG_LEVEL", "INFO").upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stdout)
    ]
)

logger = logging.getLogger(__name__)

# Suppress noisy loggers
logging.getLogger('matplotlib').setLevel(logging.WARNING)
logging.getLogger('PIL').setLevel(logging.WARNING)


if __name__ == "__main__":
    sys.exit(run_command(sys.argv[1:]))
