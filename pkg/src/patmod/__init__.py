"""patmod: single-image point-cloud reconstruction with learned local region patterns."""

__version__ = "0.1.0"
