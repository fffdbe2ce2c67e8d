"""scenlab sources and shared utilities."""
