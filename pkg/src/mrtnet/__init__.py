"""Multiresolution tree networks for point clouds."""
