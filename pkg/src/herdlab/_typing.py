Level = int
