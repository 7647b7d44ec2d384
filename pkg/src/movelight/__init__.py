"""Point-queue traffic simulation with classical and phase-competition DQN signal control."""

__version__ = "0.1.0"
