"""
Submodel co-training (cosub) with efficient stochastic depth on a
small numpy autograd engine.
"""
