"""Tests for scenlab."""
