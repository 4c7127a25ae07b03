"""Tests package for gcn_pipeline."""
