"""Tile maps, games, repair datasets, the repair network, generation and metrics"""
