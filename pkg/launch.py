#!/usr/bin/env python3
"""
Pipeline Training Simulator Launcher
Usage: python launch.py <subcommand> [args...]
Checks the environment, then hands the arguments to the experiment CLI.
"""

import os
import sys
from typing import Dict, List, Optional

REQUIRED_PACKAGES: Dict[str, str] = {
    'numpy': 'numpy',
    'pandas': 'pandas',
    'dotenv': 'python-dotenv',
}


def check_dependencies(packages: Optional[Dict[str, str]] = None, verbose: bool = True) -> List[str]:
    """Return the install names of required packages that fail to import."""
    missing_packages = []

    for package, conda_name in (packages or REQUIRED_PACKAGES).items():
        try:
            __import__(package)
            if verbose:
                print(f"✅ {package}")
        except ImportError:
            if verbose:
                print(f"❌ {package} (install with: conda install -c conda-forge {conda_name})")
            missing_packages.append(conda_name)

    return missing_packages


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    quiet = '--quiet' in argv

    if not quiet:
        print("🚀 Pipeline Training Simulator")
        print("=" * 50)
        print(f"🐍 Python version: {sys.version.split()[0]}")
        print(f"🏠 Conda environment: {os.environ.get('CONDA_DEFAULT_ENV', 'none')}")
        print("\n🔍 Checking dependencies...")

    missing = check_dependencies(verbose=not quiet)
    if missing:
        print(f"\n❌ Missing packages: {', '.join(missing)}")
        print(f"conda install -c conda-forge {' '.join(missing)}")
        return 1

    if not argv:
        print("\nUsage: python launch.py {run,sweep,validate,timeline} ...")
        return 1

    from experiment_cli import main as cli_main
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
