"""Tests for the disentangle-seg library."""
