"""Tests for Pai Note Exporter."""
