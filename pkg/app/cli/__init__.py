from app.cli import data, design, eig, surrogate, verify

ROUTERS = [data.router, surrogate.router, eig.router, design.router, verify.router]
