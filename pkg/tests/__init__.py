"""
Factored agent test suite
"""
