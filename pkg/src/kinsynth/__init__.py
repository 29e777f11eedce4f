"""Parent-to-child face synthesis with a frozen face encoder, an energy-based
adversarial regularizer, an auxiliary gender classifier and cycle consistency."""

__version__ = "0.1.0"
