"""Test suite for covfilt."""
