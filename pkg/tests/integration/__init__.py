"""
Integration tests for the factored agent
"""
