"""Tests for tnorm-shield."""
