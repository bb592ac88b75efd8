"""Regularized prototypical Neural-ODE few-shot segmentation."""
