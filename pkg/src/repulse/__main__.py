"""Allow running as python -m repulse."""

from repulse.cli import main

if __name__ == "__main__":
    main()
