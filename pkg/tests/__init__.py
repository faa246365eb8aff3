"""Test suite for stochmatch."""
