"""
Pipeline stages: wheel generation, stress oracle, labels, networks, surrogate and evaluation
"""
