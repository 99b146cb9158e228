"""End-to-end tests for covfilt."""
