"""Domain modules: stimuli, network, training, closure measurement, statistics and experiments."""
