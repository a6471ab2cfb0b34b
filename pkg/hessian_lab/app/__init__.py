# Hessian lab application package
