import os
import sys

# --- Path Setup ---
project_root = os.path.dirname(os.path.abspath(__file__))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from src.cli import main  # noqa: E402

if __name__ == "__main__":
    main()
