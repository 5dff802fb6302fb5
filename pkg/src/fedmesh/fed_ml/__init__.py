"""Federated ML building blocks and the apps that wrap them."""
