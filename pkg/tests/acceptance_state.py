ACCEPTANCE: dict = {}
