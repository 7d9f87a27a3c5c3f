"""
Unit tests for the factored agent
"""
