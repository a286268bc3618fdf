"""Experiment drivers: configs, the Kalman oracle, runs, sweeps and plots."""
