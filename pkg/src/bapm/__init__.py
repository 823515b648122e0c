"""Batch-adaptive pair matching designs with regression-adjusted inference."""
