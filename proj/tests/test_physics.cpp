// populated with the module it names
