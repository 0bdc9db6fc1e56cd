"""Hand-computed metric cases: (prediction, gold, exact_match, token_f1)."""

METRIC_TABLE = [
    ("The answer is Paris.", "Paris", True, 2 / 5),
    ("parisian", "Paris", True, 0.0),
    ("London", "Paris", False, 0.0),
    ("  PARIS  ", "paris", True, 1.0),
    ("", "", True, 1.0),
    ("", "Paris", False, 0.0),
    ("Paris", "", True, 0.0),
    ("New   York City", "new york", True, 0.8),
    ("the the cat", "the cat", True, 0.8),
    ("\"Berlin!\"", "berlin", True, 1.0),
    ("Rome, Italy", "Italy, Rome", False, 1.0),
    ("blue whale", "the blue whale", False, 0.8),
]
