# Pipeline agent
