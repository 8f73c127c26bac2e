import os
import argparse
import subprocess
import sys
from pathlib import Path

default_threads = os.environ.get("DUALCT_THREADS", "1")
default_log_level = os.environ.get("LOG_LEVEL", "INFO")

parser = argparse.ArgumentParser(description="Installs requirements and runs a dualct command")
parser.add_argument("--threads", "-t", default=default_threads)
parser.add_argument("--log-level", "-l", default=default_log_level)
parser.add_argument("--skip-install", action="store_true")
parser.add_argument("--python", default=sys.executable)
args, command = parser.parse_known_args()

SCRIPT_DIR = os.path.dirname(os.path.realpath(__file__))
ROOT_DIR = Path(SCRIPT_DIR).resolve().parents[1]
SOURCE_DIR = Path(SCRIPT_DIR).resolve().parents[0]

os.environ["PYTHONPATH"] = os.pathsep.join([str(SOURCE_DIR), os.environ.get("PYTHONPATH", "")])
os.environ["DUALCT_THREADS"] = str(args.threads)
os.environ["LOG_LEVEL"] = args.log_level

REQ_FILE = ROOT_DIR.joinpath("requirements.txt")
if not args.skip_install:
    subprocess.run([args.python, "-m", "pip", "install", "-r", str(REQ_FILE)])
result = subprocess.run(
    [args.python, os.path.join(SCRIPT_DIR, "app.py"), *command],
    stderr=subprocess.STDOUT,
)
sys.exit(result.returncode)
