"""Test suite for hyperseg."""
