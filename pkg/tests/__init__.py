"""Tests for radar-fusion."""
