# SSM Lab Package
