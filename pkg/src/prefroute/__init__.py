"""Learning routing preferences from historical CVRP solutions."""
