"""
Test Suite for fnope-bench
"""
