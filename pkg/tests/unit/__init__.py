"""Unit tests for onlinest-core."""
