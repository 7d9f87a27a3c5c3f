"""
Torch modules of the factorized agent and the rollout policy wrapper.
"""
