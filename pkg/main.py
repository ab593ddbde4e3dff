"""Entry point for the centroid field codec command line."""
from __future__ import annotations

from centroid_codec.cli import main


if __name__ == "__main__":
    main()
