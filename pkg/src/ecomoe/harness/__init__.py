"""Configuration, experiment runs, analytics and the command line."""
