"""Integration tests for onlinest-core."""
