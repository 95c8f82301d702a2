"""
Gestalt closure in convolutional networks: stimuli, training, and closure measurement.
"""

__version__ = "0.1.0"
