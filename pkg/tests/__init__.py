"""Tests for the rollbundle package."""
