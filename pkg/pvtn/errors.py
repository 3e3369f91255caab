"""
Errors Module for PVTN

Every failure a protocol step can report has its own exception class so
that the event loop can record the class name in the trace. All of them
derive from PvtnError; anything else escaping a handler is a bug.
"""


class PvtnError(Exception):
    """Base error for the PVTN library."""


class ProviderError(PvtnError):
    """Malformed key or input handed to a crypto provider."""


class DecryptionFailure(PvtnError):
    """Ciphertext could not be opened with the given private key."""


class SignatureInvalid(PvtnError):
    """A signature did not verify, or the signer is unknown or revoked."""


class KeyNotVisible(PvtnError):
    """The sender does not hold the recipient's public key."""


class NoParent(PvtnError):
    """Operation needs a parent but the node is a root."""


class NotAManager(PvtnError):
    """Operation needs a Root or Manager role."""


class IssuerRevoked(PvtnError):
    """The issuing node has been revoked."""


class NotAuthorized(PvtnError):
    """The caller has no authority over the subject."""


class UpgradeNotApproved(PvtnError):
    """Promotion attempted without an approved upgrade decision."""


class ReplayRejected(PvtnError):
    """A nonce or decision was seen before."""


class StaleDecision(PvtnError):
    """Decision timestamp outside the freshness window."""


class DecisionMismatch(PvtnError):
    """Decision does not match the pending request it claims to answer."""


class ScopeExceeded(PvtnError):
    """Requested scope is outside the issuer's delegated authority."""


class ConflictDetected(PvtnError):
    """Join rejected because the key is, or is being, revoked or used."""


class MalformedPayload(PvtnError):
    """A decrypted message body is missing fields or has the wrong shape."""


class DeliveryFailed(PvtnError):
    """The overlay could not reach the destination."""


class NonTermination(PvtnError):
    """The event loop passed its tick bound without reaching quiescence."""


class ModelViolation(PvtnError):
    """An adversary action needs keys the adversary does not hold."""


class InvariantViolation(PvtnError):
    """A structural invariant of the tree or key visibility was broken."""


class ScenarioError(PvtnError):
    """Scenario file failed to parse or validate."""

    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location
