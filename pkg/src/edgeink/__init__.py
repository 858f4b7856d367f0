"""Edge-structure invisible backdoor attack toolkit."""

__version__ = "0.1.0"
