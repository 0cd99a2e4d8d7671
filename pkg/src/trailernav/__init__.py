"""Learning-augmented receding-horizon navigation for a vehicle towing an unknown trailer."""

__version__ = "0.1.0"
